//! Unsupervised part segmentation from the importance matrix: each point
//! is labeled by the hand part owning its most-contributed pose
//! dimension, or background when every importance entry is small.

use std::path::Path;

use crate::error::RespelError;
use crate::preprocess::PointCloud;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PartLabel {
    Palm,
    Thumb,
    Index,
    Middle,
    Ring,
    Pinky,
    Background,
}

impl PartLabel {
    pub const ALL: [PartLabel; 7] = [
        PartLabel::Palm,
        PartLabel::Thumb,
        PartLabel::Index,
        PartLabel::Middle,
        PartLabel::Ring,
        PartLabel::Pinky,
        PartLabel::Background,
    ];

    /// Export color (r, g, b).
    pub fn color(self) -> [u8; 3] {
        match self {
            PartLabel::Palm => [255, 0, 0],
            PartLabel::Thumb => [0, 255, 0],
            PartLabel::Index => [0, 0, 255],
            PartLabel::Middle => [255, 255, 0],
            PartLabel::Ring => [0, 255, 255],
            PartLabel::Pinky => [255, 0, 255],
            PartLabel::Background => [128, 128, 128],
        }
    }

    /// Matches the synthetic generator's part ids (palm 0, fingers 1..=5).
    pub fn from_part_id(id: u8) -> Option<PartLabel> {
        match id {
            0 => Some(PartLabel::Palm),
            1 => Some(PartLabel::Thumb),
            2 => Some(PartLabel::Index),
            3 => Some(PartLabel::Middle),
            4 => Some(PartLabel::Ring),
            5 => Some(PartLabel::Pinky),
            _ => None,
        }
    }
}

/// Total map from pose dimension to part (background excluded).
#[derive(Debug, Clone)]
pub struct PartMap {
    parts: Vec<PartLabel>,
}

impl PartMap {
    pub fn new(parts: Vec<PartLabel>) -> Result<Self, RespelError> {
        if parts.is_empty() {
            return Err(RespelError::Config("empty part map".into()));
        }
        if parts.contains(&PartLabel::Background) {
            return Err(RespelError::Config(
                "part map may not assign pose dimensions to the background".into(),
            ));
        }
        Ok(Self { parts })
    }

    /// The synthetic skeleton's layout: per joint, all 3 coordinates map
    /// to the joint's part.
    pub fn for_synthetic() -> Self {
        let parts = (0..crate::synth::JOINT_COUNT)
            .flat_map(|j| {
                let part = PartLabel::from_part_id(crate::synth::joint_part(j))
                    .expect("generator ids are 0..=5");
                [part; 3]
            })
            .collect();
        Self { parts }
    }

    pub fn len(&self) -> usize {
        self.parts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parts.is_empty()
    }

    pub fn part(&self, dim: usize) -> PartLabel {
        self.parts[dim]
    }
}

/// Row-wise argmax labeling: ties go to the lowest dimension; rows whose
/// maximum importance is below `threshold` become background.
pub fn segment_points(
    importance: &[f64],
    partmap: &PartMap,
    threshold: f64,
) -> Result<Vec<PartLabel>, RespelError> {
    let j = partmap.len();
    if importance.is_empty() || !importance.len().is_multiple_of(j) {
        return Err(RespelError::Config(format!(
            "importance length {} is not a positive multiple of J={j}",
            importance.len()
        )));
    }
    Ok(importance
        .chunks(j)
        .map(|row| {
            let mut best = row[0];
            let mut best_dim = 0;
            for (d, &v) in row.iter().enumerate().skip(1) {
                if v > best {
                    best = v;
                    best_dim = d;
                }
            }
            if best < threshold {
                PartLabel::Background
            } else {
                partmap.part(best_dim)
            }
        })
        .collect())
}

/// ASCII point file, one `x y z r g b` line per vertex.
pub fn export_colored(
    path: &Path,
    cloud: &PointCloud,
    labels: &[PartLabel],
) -> Result<(), RespelError> {
    if labels.is_empty() {
        return Err(RespelError::Config("empty label set".into()));
    }
    if labels.len() != cloud.len() {
        return Err(RespelError::Config(format!(
            "{} labels for {} points",
            labels.len(),
            cloud.len()
        )));
    }
    let mut text = String::new();
    for (p, l) in cloud.points.iter().zip(labels) {
        let [r, g, b] = l.color();
        text.push_str(&format!("{} {} {} {r} {g} {b}\n", p[0], p[1], p[2]));
    }
    std::fs::write(path, text).map_err(|e| RespelError::Io(format!("{}: {e}", path.display())))
}

/// Points and their RGB colors, as read back from a colored export.
pub type ColoredPoints = (Vec<[f64; 3]>, Vec<[u8; 3]>);

pub fn read_colored(path: &Path) -> Result<ColoredPoints, RespelError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| RespelError::Io(format!("{}: {e}", path.display())))?;
    let mut points = Vec::new();
    let mut colors = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 6 {
            return Err(RespelError::Io(format!(
                "{}: line {}: expected 6 fields, got {}",
                path.display(),
                i + 1,
                fields.len()
            )));
        }
        let parse = |s: &str| -> Result<f64, RespelError> {
            s.parse()
                .map_err(|e| RespelError::Io(format!("{}: line {}: {e}", path.display(), i + 1)))
        };
        points.push([parse(fields[0])?, parse(fields[1])?, parse(fields[2])?]);
        colors.push([
            parse(fields[3])? as u8,
            parse(fields[4])? as u8,
            parse(fields[5])? as u8,
        ]);
    }
    Ok((points, colors))
}
