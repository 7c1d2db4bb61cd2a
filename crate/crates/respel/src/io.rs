//! On-disk formats: point-cloud text files, pose vectors, per-point part
//! labels and the binary depth format.
//!
//! Point-cloud text: one header line `N`, then N lines `x y z` (mm,
//! camera frame). Pose: a single line of J whitespace-separated values
//! (mm). Labels: one integer part id per line. Depth: 16-byte header
//! (8-byte magic "RESPDEPTH"[..8], u32 height, u32 width, little endian)
//! followed by row-major u16 depth in mm.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::RespelError;
use crate::preprocess::{Frame, PointCloud, PoseVector};

pub const DEPTH_MAGIC: &[u8; 8] = b"RESPDPTH";

fn io_err(path: &Path, e: impl std::fmt::Display) -> RespelError {
    RespelError::Io(format!("{}: {e}", path.display()))
}

pub fn write_points(path: &Path, cloud: &PointCloud) -> Result<(), RespelError> {
    let file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    let mut emit = || -> std::io::Result<()> {
        writeln!(w, "{}", cloud.len())?;
        for p in &cloud.points {
            writeln!(w, "{} {} {}", p[0], p[1], p[2])?;
        }
        w.flush()
    };
    emit().map_err(|e| io_err(path, e))
}

pub fn read_points(path: &Path) -> Result<PointCloud, RespelError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut lines = text.lines();
    let n: usize = lines
        .next()
        .ok_or_else(|| io_err(path, "empty file"))?
        .trim()
        .parse()
        .map_err(|e| io_err(path, format!("bad header: {e}")))?;
    let mut points = Vec::with_capacity(n);
    for (i, line) in lines.enumerate().take(n) {
        let mut it = line.split_whitespace();
        let mut coord = [0.0f64; 3];
        for c in &mut coord {
            *c = it
                .next()
                .ok_or_else(|| io_err(path, format!("line {}: missing coordinate", i + 2)))?
                .parse()
                .map_err(|e| io_err(path, format!("line {}: {e}", i + 2)))?;
        }
        points.push(coord);
    }
    if points.len() != n {
        return Err(io_err(
            path,
            format!("header says {n} points, found {}", points.len()),
        ));
    }
    PointCloud::new(points, Frame::CameraMm)
}

pub fn write_pose(path: &Path, pose: &[f64]) -> Result<(), RespelError> {
    let line = pose
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(" ");
    fs::write(path, line + "\n").map_err(|e| io_err(path, e))
}

pub fn read_pose(path: &Path) -> Result<PoseVector, RespelError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let pose: Result<Vec<f64>, _> = text.split_whitespace().map(str::parse).collect();
    let pose = pose.map_err(|e| io_err(path, format!("bad pose value: {e}")))?;
    if pose.is_empty() || pose.len() % 3 != 0 {
        return Err(io_err(
            path,
            format!("pose length {} is not a positive multiple of 3", pose.len()),
        ));
    }
    Ok(pose)
}

pub fn write_labels(path: &Path, labels: &[u8]) -> Result<(), RespelError> {
    let mut text = String::with_capacity(labels.len() * 2);
    for l in labels {
        text.push_str(&l.to_string());
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

pub fn read_labels(path: &Path) -> Result<Vec<u8>, RespelError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    text.lines()
        .map(|l| {
            l.trim()
                .parse()
                .map_err(|e| io_err(path, format!("bad label: {e}")))
        })
        .collect()
}

pub struct DepthImage {
    pub height: usize,
    pub width: usize,
    /// Row-major depth in mm; 0 means invalid.
    pub depth_mm: Vec<u16>,
}

pub fn write_depth(path: &Path, img: &DepthImage) -> Result<(), RespelError> {
    if img.depth_mm.len() != img.height * img.width {
        return Err(RespelError::Io(format!(
            "depth buffer {} does not match {}x{}",
            img.depth_mm.len(),
            img.height,
            img.width
        )));
    }
    let mut bytes = Vec::with_capacity(16 + img.depth_mm.len() * 2);
    bytes.extend_from_slice(DEPTH_MAGIC);
    bytes.extend_from_slice(&(img.height as u32).to_le_bytes());
    bytes.extend_from_slice(&(img.width as u32).to_le_bytes());
    for d in &img.depth_mm {
        bytes.extend_from_slice(&d.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

pub fn read_depth(path: &Path) -> Result<DepthImage, RespelError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    if bytes.len() < 16 || &bytes[..8] != DEPTH_MAGIC {
        return Err(io_err(path, "not a depth file (bad magic or too short)"));
    }
    let height = u32::from_le_bytes(bytes[8..12].try_into().expect("len")) as usize;
    let width = u32::from_le_bytes(bytes[12..16].try_into().expect("len")) as usize;
    let expect = 16 + height * width * 2;
    if bytes.len() != expect {
        return Err(io_err(
            path,
            format!("expected {expect} bytes for {height}x{width}, got {}", bytes.len()),
        ));
    }
    let depth_mm = bytes[16..]
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect();
    Ok(DepthImage {
        height,
        width,
        depth_mm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn points_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.pts");
        let cloud = PointCloud::new(
            vec![[1.5, -2.0, 300.0], [0.25, 0.0, 450.5]],
            Frame::CameraMm,
        )
        .unwrap();
        write_points(&path, &cloud).unwrap();
        let back = read_points(&path).unwrap();
        assert_eq!(back.points, cloud.points);
    }

    #[test]
    fn truncated_points_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.pts");
        fs::write(&path, "3\n1 2 3\n4 5 6\n").unwrap();
        assert!(read_points(&path).is_err());
    }

    #[test]
    fn pose_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.pose");
        let pose = vec![1.0, 2.0, 3.0, -4.5, 5.0, 6.25];
        write_pose(&path, &pose).unwrap();
        assert_eq!(read_pose(&path).unwrap(), pose);
        write_pose(&path, &[1.0, 2.0]).unwrap();
        assert!(read_pose(&path).is_err());
    }

    #[test]
    fn labels_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.labels");
        let labels = vec![0u8, 3, 5, 1, 1, 2];
        write_labels(&path, &labels).unwrap();
        assert_eq!(read_labels(&path).unwrap(), labels);
    }

    #[test]
    fn depth_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.depth");
        let img = DepthImage {
            height: 2,
            width: 3,
            depth_mm: vec![0, 450, 460, 470, 0, 480],
        };
        write_depth(&path, &img).unwrap();
        let back = read_depth(&path).unwrap();
        assert_eq!((back.height, back.width), (2, 3));
        assert_eq!(back.depth_mm, img.depth_mm);

        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 1);
        fs::write(&path, &bytes).unwrap();
        assert!(read_depth(&path).is_err());
    }
}
