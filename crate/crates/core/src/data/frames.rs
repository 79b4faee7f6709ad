use std::path::{Path, PathBuf};

use image::imageops::FilterType;

use super::video::{byte_to_unit, VideoTensor};
use crate::error::{Error, Result};

const EXTENSIONS: &[&str] = &["png", "jpg", "jpeg"];

fn frame_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().and_then(|e| e.to_str()).is_some_and(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str())))
        .collect();
    paths.sort();
    Ok(paths)
}

/// Decode the first `frames` images (lexicographic order) of `dir`, resize them
/// bilinearly to `height × width` and normalize to `[-1, 1]`.
pub fn load_frame_dir(dir: &Path, frames: usize, height: usize, width: usize) -> Result<VideoTensor> {
    if frames == 0 || height == 0 || width == 0 {
        return Err(Error::invalid("frame count and size must be positive"));
    }
    let paths = frame_paths(dir)?;
    if paths.len() < frames {
        return Err(Error::invalid(format!("{} holds {} frames, {frames} requested", dir.display(), paths.len())));
    }
    let mut data = Vec::with_capacity(frames * height * width * 3);
    for (index, path) in paths.iter().take(frames).enumerate() {
        let img = image::open(path).map_err(|_| Error::Decode { path: path.clone(), index })?;
        let img = img.to_rgb8();
        let img = if img.dimensions() == (width as u32, height as u32) {
            img
        } else {
            image::imageops::resize(&img, width as u32, height as u32, FilterType::Triangle)
        };
        data.extend(img.as_raw().iter().map(|&b| byte_to_unit(b)));
    }
    VideoTensor::from_data(frames, height, width, 3, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{Rgb, RgbImage};

    fn write_frames(dir: &Path, count: usize, size: u32) {
        for i in 0..count {
            let img = RgbImage::from_fn(size, size, |x, _| Rgb([(i * 8) as u8, if x == 0 { 0 } else { 255 }, 128]));
            img.save(dir.join(format!("frame_{i:03}.png"))).unwrap();
        }
    }

    #[test]
    fn takes_lexicographic_prefix() {
        let dir = tempfile::tempdir().unwrap();
        write_frames(dir.path(), 30, 4);
        let v = load_frame_dir(dir.path(), 10, 4, 4).unwrap();
        assert_eq!(v.dims(), [10, 4, 4, 3]);
        for f in 0..10 {
            assert_eq!(v.get(f, 0, 1, 0), byte_to_unit((f * 8) as u8));
        }
        assert_eq!(v.get(0, 0, 0, 1), -1.0);
        assert_eq!(v.get(0, 0, 1, 1), 1.0);
    }

    #[test]
    fn resizes_to_requested_size() {
        let dir = tempfile::tempdir().unwrap();
        write_frames(dir.path(), 2, 8);
        let v = load_frame_dir(dir.path(), 2, 4, 6).unwrap();
        assert_eq!(v.dims(), [2, 4, 6, 3]);
        assert!(v.is_normalized());
    }

    #[test]
    fn too_few_frames_names_directory_and_counts() {
        let dir = tempfile::tempdir().unwrap();
        write_frames(dir.path(), 12, 4);
        let err = load_frame_dir(dir.path(), 16, 4, 4).unwrap_err().to_string();
        assert!(err.contains(&dir.path().display().to_string()), "{err}");
        assert!(err.contains("12") && err.contains("16"), "{err}");
    }

    #[test]
    fn missing_directory_and_bad_frames() {
        assert!(matches!(load_frame_dir(Path::new("/nonexistent/frames"), 1, 4, 4), Err(Error::Io { .. })));
        let dir = tempfile::tempdir().unwrap();
        write_frames(dir.path(), 1, 4);
        std::fs::write(dir.path().join("frame_001.png"), b"not a png").unwrap();
        match load_frame_dir(dir.path(), 2, 4, 4) {
            Err(Error::Decode { index, .. }) => assert_eq!(index, 1),
            other => panic!("expected decode error, got {other:?}"),
        }
    }
}
